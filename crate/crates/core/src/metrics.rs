//! Evaluation protocol: pluggable embedders, pairwise similarity, the
//! prefixed text score, background-noise masking and the harmonic score.
//!
//! The default embedders are small deterministic stand-ins; the aggregation
//! arithmetic is the part that matters and is exact.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::cosine;
use crate::image::{ImageRaster, Mask};
use crate::rng::{self, CounterStream};

pub const TEXT_PREFIX: &str = "A photo depicts";
pub const TEXT_SCORE_SCALE: f64 = 2.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub clip_t: f64,
    pub clip_i: f64,
    /// A distance; enters the harmonic mean as `1 - dreamsim`.
    pub dreamsim: f64,
    pub dino: f64,
}

impl ScoreSet {
    pub fn new(clip_t: f64, clip_i: f64, dreamsim: f64, dino: f64) -> Self {
        Self {
            clip_t,
            clip_i,
            dreamsim,
            dino,
        }
    }

    /// Parses `"clip_t,clip_i,dreamsim,dino"`.
    pub fn parse(text: &str) -> Result<Self> {
        let vals = text
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::validation(format!("bad score `{}`", s.trim())))
            })
            .collect::<Result<Vec<_>>>()?;
        match vals[..] {
            [a, b, c, d] => Ok(Self::new(a, b, c, d)),
            _ => Err(Error::validation(format!(
                "expected 4 comma-separated scores, got {}",
                vals.len()
            ))),
        }
    }

    pub fn harmonic(&self) -> Result<f64> {
        harmonic_score(self)
    }
}

/// Harmonic mean of CLIP-T, CLIP-I, `1 - DreamSim` and DINO.
pub fn harmonic_score(scores: &ScoreSet) -> Result<f64> {
    let parts = [
        ("clip_t", scores.clip_t),
        ("clip_i", scores.clip_i),
        ("1 - dreamsim", 1.0 - scores.dreamsim),
        ("dino", scores.dino),
    ];
    let mut inv = 0.0;
    for (name, v) in parts {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::Domain(format!("{name} = {v} must be positive")));
        }
        inv += 1.0 / v;
    }
    Ok(4.0 / inv)
}

/// Mean cosine similarity over all unordered pairs `i < j`.
pub fn pairwise_mean_similarity(vectors: &[Vec<f64>]) -> Result<f64> {
    if vectors.len() < 2 {
        return Err(Error::validation(
            "pairwise similarity needs at least 2 vectors",
        ));
    }
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..vectors.len() {
        for j in i + 1..vectors.len() {
            sum += cosine(&vectors[i], &vectors[j])?;
            pairs += 1;
        }
    }
    Ok(sum / pairs as f64)
}

/// Prompt text as scored: the fixed prefix followed by the prompt.
pub fn prefixed_prompt(prompt: &str) -> String {
    format!("{TEXT_PREFIX} {}", prompt.trim())
}

/// `2.5 · cos(image, text)`, unclamped.
pub fn text_image_score(image_vec: &[f64], text_vec: &[f64]) -> Result<f64> {
    Ok(TEXT_SCORE_SCALE * cosine(image_vec, text_vec)?)
}

/// Replaces background pixels (mask false) with seeded uniform noise, one
/// byte per channel addressed by `pixel · 3 + channel`.
pub fn apply_background_noise(image: &ImageRaster, mask: &Mask, seed: u64) -> Result<ImageRaster> {
    if (image.width(), image.height()) != (mask.width(), mask.height()) {
        return Err(Error::shape(format!(
            "mask {}x{} does not match image {}x{}",
            mask.width(),
            mask.height(),
            image.width(),
            image.height()
        )));
    }
    let mut out = image.clone();
    let mut noise = CounterStream::new("storyscale/background", &[seed]);
    let width = image.width();
    for y in 0..image.height() {
        for x in 0..width {
            if mask.get(x, y) {
                continue;
            }
            let p = (y * width + x) * 3;
            for c in 0..3 {
                let u = noise.at((p + c) as u64);
                out.pixels_mut()[p + c] = (u * 256.0).floor().min(255.0) as u8;
            }
        }
    }
    Ok(out)
}

pub trait ImageEmbedder {
    fn name(&self) -> &str;
    fn embed(&self, image: &ImageRaster) -> Vec<f64>;
}

pub trait TextEmbedder {
    fn name(&self) -> &str;
    fn embed(&self, text: &str) -> Vec<f64>;
}

/// Perceptual distance between two images, in `[0, 1]`.
pub trait ImageDistance {
    fn name(&self) -> &str;
    fn distance(&self, a: &ImageRaster, b: &ImageRaster) -> f64;
}

pub const TOY_EMBED_DIM: usize = 36;
const HIST_BINS: usize = 8;

/// Per-channel 8-bin intensity histograms (as fractions of pixels) followed
/// by the per-channel mean of each 2×2 quadrant (scaled to `[0, 1]`),
/// L2-normalized. Integer nearest-neighbor enlargement leaves it unchanged
/// for even-sized images.
pub fn toy_embed_image(image: &ImageRaster) -> Vec<f64> {
    let (w, h) = (image.width(), image.height());
    let mut out = vec![0.0; TOY_EMBED_DIM];
    let npix = (w * h).max(1) as f64;
    for px in image.pixels().chunks_exact(3) {
        for (c, &v) in px.iter().enumerate() {
            out[c * HIST_BINS + usize::from(v) / 32] += 1.0 / npix;
        }
    }
    let (hy, hx) = (h.div_ceil(2), w.div_ceil(2));
    let base = 3 * HIST_BINS;
    for (q, (ys, xs)) in [
        (0..hy, 0..hx),
        (0..hy, hx..w),
        (hy..h, 0..hx),
        (hy..h, hx..w),
    ]
    .into_iter()
    .enumerate()
    {
        let mut sum = [0.0; 3];
        let mut count = 0usize;
        for y in ys {
            for x in xs.clone() {
                let p = image.pixel(x, y);
                for c in 0..3 {
                    sum[c] += f64::from(p[c]);
                }
                count += 1;
            }
        }
        if count > 0 {
            for c in 0..3 {
                out[base + q * 3 + c] = sum[c] / (count as f64 * 255.0);
            }
        }
    }
    let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        out.iter_mut().for_each(|v| *v /= norm);
    }
    out
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ToyImageEmbedder;

impl ImageEmbedder for ToyImageEmbedder {
    fn name(&self) -> &str {
        "toy-histogram-quadrant"
    }

    fn embed(&self, image: &ImageRaster) -> Vec<f64> {
        toy_embed_image(image)
    }
}

/// Mean of seeded non-negative per-token vectors in the toy image space.
#[derive(Debug, Clone, Copy, Default)]
pub struct ToyTextEmbedder {
    pub seed: u64,
}

impl TextEmbedder for ToyTextEmbedder {
    fn name(&self) -> &str {
        "toy-token-hash"
    }

    fn embed(&self, text: &str) -> Vec<f64> {
        let mut out = vec![0.0; TOY_EMBED_DIM];
        for token in text.split_whitespace() {
            let seed = rng::derive_seed_with_bytes(
                "storyscale/text-embed",
                &[self.seed],
                token.to_lowercase().as_bytes(),
            );
            let mut r = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::from_seed(seed);
            for v in out.iter_mut() {
                *v += rand::Rng::random::<f64>(&mut r);
            }
        }
        out
    }
}

pub struct Embedders {
    pub identity: Box<dyn ImageEmbedder>,
    pub style: Box<dyn ImageEmbedder>,
    pub image_text: Box<dyn ImageEmbedder>,
    pub text: Box<dyn TextEmbedder>,
    pub distance: Option<Box<dyn ImageDistance>>,
}

impl Default for Embedders {
    fn default() -> Self {
        Self {
            identity: Box::new(ToyImageEmbedder),
            style: Box::new(ToyImageEmbedder),
            image_text: Box::new(ToyImageEmbedder),
            text: Box::new(ToyTextEmbedder::default()),
            distance: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub image_count: usize,
    pub scores: ScoreSet,
    pub harmonic_score: Option<f64>,
    pub harmonic_error: Option<String>,
    pub identity_embedder: String,
    pub style_embedder: String,
    pub text_embedder: String,
    pub distance_embedder: Option<String>,
    /// True when `dreamsim` is `1 - clip_i` rather than a real distance.
    pub dreamsim_is_proxy: bool,
    pub masked: bool,
    pub text_prefix: String,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EvaluationConfig {
    pub noise_seed: u64,
}

/// Assembles the score set for one story.
///
/// Identity is the pairwise similarity of (masked) images, style the
/// pairwise similarity of unmasked images, prompt fidelity the mean prefixed
/// text score. Without a distance plugin, `dreamsim = 1 - identity`.
pub fn evaluate_run(
    images: &[ImageRaster],
    prompts: &[String],
    masks: Option<&[Mask]>,
    embedders: &Embedders,
    config: &EvaluationConfig,
) -> Result<EvaluationReport> {
    if images.len() < 2 {
        return Err(Error::validation("evaluation needs at least 2 images"));
    }
    if prompts.len() != images.len() {
        return Err(Error::validation(format!(
            "{} prompts for {} images",
            prompts.len(),
            images.len()
        )));
    }
    let masked_images: Vec<ImageRaster> = match masks {
        Some(ms) => {
            if ms.len() != images.len() {
                return Err(Error::validation("one mask per image required"));
            }
            images
                .iter()
                .zip(ms)
                .enumerate()
                .map(|(i, (img, m))| {
                    apply_background_noise(img, m, config.noise_seed.wrapping_add(i as u64))
                })
                .collect::<Result<_>>()?
        }
        None => images.to_vec(),
    };

    let identity_vecs: Vec<Vec<f64>> = masked_images
        .iter()
        .map(|i| embedders.identity.embed(i))
        .collect();
    let clip_i = pairwise_mean_similarity(&identity_vecs)?;
    let style_vecs: Vec<Vec<f64>> = images.iter().map(|i| embedders.style.embed(i)).collect();
    let dino = pairwise_mean_similarity(&style_vecs)?;

    let mut text_total = 0.0;
    for (img, prompt) in images.iter().zip(prompts) {
        let iv = embedders.image_text.embed(img);
        let tv = embedders.text.embed(&prefixed_prompt(prompt));
        text_total += text_image_score(&iv, &tv)?;
    }
    let clip_t = text_total / images.len() as f64;

    let (dreamsim, proxy) = match &embedders.distance {
        Some(dist) => {
            let mut total = 0.0;
            let mut pairs = 0usize;
            for i in 0..masked_images.len() {
                for j in i + 1..masked_images.len() {
                    total += dist.distance(&masked_images[i], &masked_images[j]);
                    pairs += 1;
                }
            }
            (total / pairs as f64, false)
        }
        None => (1.0 - clip_i, true),
    };

    let mut warnings = Vec::new();
    if clip_t > 1.0 {
        warnings.push(format!("clip_t = {clip_t} exceeds 1 (reported unclamped)"));
    }
    let scores = ScoreSet::new(clip_t, clip_i, dreamsim, dino);
    let (harmonic, harmonic_error) = match harmonic_score(&scores) {
        Ok(v) => (Some(v), None),
        Err(e) => (None, Some(e.to_string())),
    };
    Ok(EvaluationReport {
        image_count: images.len(),
        scores,
        harmonic_score: harmonic,
        harmonic_error,
        identity_embedder: embedders.identity.name().to_string(),
        style_embedder: embedders.style.name().to_string(),
        text_embedder: embedders.text.name().to_string(),
        distance_embedder: embedders.distance.as_ref().map(|d| d.name().to_string()),
        dreamsim_is_proxy: proxy,
        masked: masks.is_some(),
        text_prefix: TEXT_PREFIX.to_string(),
        warnings,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreDelta {
    pub clip_t: f64,
    pub clip_i: f64,
    pub dreamsim: f64,
    pub dino: f64,
    pub harmonic_score: Option<f64>,
}

/// Two evaluations side by side with `b - a` differences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub a: EvaluationReport,
    pub b: EvaluationReport,
    pub difference: ScoreDelta,
}

pub fn compare_reports(a: EvaluationReport, b: EvaluationReport) -> ComparisonReport {
    let difference = ScoreDelta {
        clip_t: b.scores.clip_t - a.scores.clip_t,
        clip_i: b.scores.clip_i - a.scores.clip_i,
        dreamsim: b.scores.dreamsim - a.scores.dreamsim,
        dino: b.scores.dino - a.scores.dino,
        harmonic_score: a.harmonic_score.zip(b.harmonic_score).map(|(x, y)| y - x),
    };
    ComparisonReport { a, b, difference }
}
