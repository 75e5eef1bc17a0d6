//! Next-scale prediction substrate: scale schedules, bilinear resampling,
//! residual accumulation, binary residual quantization and the toy decoder.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageRaster;
use crate::rng;

/// Spatial sizes of the 12-step full-scale schedule.
pub const FULL_SIZES: [usize; 12] = [1, 2, 4, 6, 8, 12, 16, 20, 24, 32, 48, 64];
pub const TOY_SIZES: [usize; 4] = [1, 2, 4, 8];
pub const DEFAULT_EARLY_STEPS: [usize; 2] = [2, 3];
pub const DEFAULT_CHANNELS: usize = 32;

/// Ordered list of per-step latent sizes `(h_s, w_s)`; steps are 1-based.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScaleSchedule {
    sizes: Vec<(usize, usize)>,
    early_steps: BTreeSet<usize>,
}

impl ScaleSchedule {
    pub fn new(
        sizes: Vec<(usize, usize)>,
        early_steps: impl IntoIterator<Item = usize>,
    ) -> Result<Self> {
        if sizes.is_empty() {
            return Err(Error::validation("schedule needs at least one size"));
        }
        if sizes.iter().any(|&(h, w)| h == 0 || w == 0) {
            return Err(Error::validation("schedule sizes must be positive"));
        }
        for (i, pair) in sizes.windows(2).enumerate() {
            let ((h0, w0), (h1, w1)) = (pair[0], pair[1]);
            if h1 < h0 || w1 < w0 {
                return Err(Error::validation(format!(
                    "schedule decreases at step {}: {h0}x{w0} -> {h1}x{w1}",
                    i + 2
                )));
            }
        }
        let early_steps: BTreeSet<usize> = early_steps.into_iter().collect();
        if let Some(&bad) = early_steps.iter().find(|&&s| s == 0 || s > sizes.len()) {
            return Err(Error::validation(format!(
                "early step {bad} outside 1..={}",
                sizes.len()
            )));
        }
        Ok(Self { sizes, early_steps })
    }

    pub fn toy() -> Self {
        Self::new(
            TOY_SIZES.iter().map(|&s| (s, s)).collect(),
            DEFAULT_EARLY_STEPS,
        )
        .expect("toy schedule is valid")
    }

    pub fn full() -> Self {
        Self::new(
            FULL_SIZES.iter().map(|&s| (s, s)).collect(),
            DEFAULT_EARLY_STEPS,
        )
        .expect("full schedule is valid")
    }

    /// Parses `"1x1,2x2,4x4"` (a bare `n` means `nxn`).
    pub fn parse_sizes(text: &str) -> Result<Vec<(usize, usize)>> {
        text.split(',')
            .map(|item| {
                let item = item.trim();
                let parse = |s: &str| {
                    s.trim()
                        .parse::<usize>()
                        .map_err(|_| Error::validation(format!("bad schedule entry `{item}`")))
                };
                match item.split_once(['x', 'X']) {
                    Some((h, w)) => Ok((parse(h)?, parse(w)?)),
                    None => {
                        let s = parse(item)?;
                        Ok((s, s))
                    }
                }
            })
            .collect()
    }

    pub fn with_early_steps(&self, early_steps: impl IntoIterator<Item = usize>) -> Result<Self> {
        Self::new(self.sizes.clone(), early_steps)
    }

    pub fn sizes(&self) -> &[(usize, usize)] {
        &self.sizes
    }

    pub fn early_steps(&self) -> &BTreeSet<usize> {
        &self.early_steps
    }

    pub fn len(&self) -> usize {
        self.sizes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sizes.is_empty()
    }

    /// Size at 1-based step `s`.
    pub fn size(&self, step: usize) -> (usize, usize) {
        self.sizes[step - 1]
    }

    pub fn final_size(&self) -> (usize, usize) {
        *self.sizes.last().expect("non-empty schedule")
    }

    pub fn is_early(&self, step: usize) -> bool {
        self.early_steps.contains(&step)
    }
}

/// Dense `h × w × d` array, row-major with channels innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    h: usize,
    w: usize,
    d: usize,
    data: Vec<f64>,
}

impl Grid {
    pub fn new(h: usize, w: usize, d: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != h * w * d {
            return Err(Error::shape(format!(
                "grid {h}x{w}x{d} given {} values",
                data.len()
            )));
        }
        Ok(Self { h, w, d, data })
    }

    pub fn zeros(h: usize, w: usize, d: usize) -> Self {
        Self {
            h,
            w,
            d,
            data: vec![0.0; h * w * d],
        }
    }

    pub fn filled(h: usize, w: usize, d: usize, value: f64) -> Self {
        Self {
            h,
            w,
            d,
            data: vec![value; h * w * d],
        }
    }

    /// Every position holds the same channel vector.
    pub fn broadcast(h: usize, w: usize, channels: &[f64]) -> Self {
        let d = channels.len();
        let mut data = Vec::with_capacity(h * w * d);
        for _ in 0..h * w {
            data.extend_from_slice(channels);
        }
        Self { h, w, d, data }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.d)
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn channels(&self) -> usize {
        self.d
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.w + x) * self.d + c]
    }

    /// Channel vector at a position.
    pub fn at(&self, y: usize, x: usize) -> &[f64] {
        let i = (y * self.w + x) * self.d;
        &self.data[i..i + self.d]
    }

    pub fn add(&self, other: &Grid) -> Result<Grid> {
        if self.dims() != other.dims() {
            return Err(Error::shape(format!(
                "cannot add {:?} and {:?}",
                self.dims(),
                other.dims()
            )));
        }
        Ok(Grid {
            h: self.h,
            w: self.w,
            d: self.d,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }

    pub fn scale(&self, factor: f64) -> Grid {
        Grid {
            h: self.h,
            w: self.w,
            d: self.d,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }
}

/// Source coordinate and blend weight for half-pixel-center resampling.
fn source_coord(dst: usize, src_len: usize, dst_len: usize) -> (usize, usize, f64) {
    let ratio = src_len as f64 / dst_len as f64;
    let pos = ((dst as f64 + 0.5) * ratio - 0.5).clamp(0.0, (src_len - 1) as f64);
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(src_len - 1);
    (lo, hi, pos - lo as f64)
}

/// Bilinear resampling with half-pixel centers and edge clamping, applied per
/// channel. Works in both directions; equal sizes return an exact copy.
pub fn resample_bilinear(src: &Grid, target: (usize, usize)) -> Result<Grid> {
    let (th, tw) = target;
    if th == 0 || tw == 0 {
        return Err(Error::validation("resample target must be non-empty"));
    }
    if (src.h, src.w) == target {
        return Ok(src.clone());
    }
    let d = src.d;
    let cols: Vec<_> = (0..tw).map(|x| source_coord(x, src.w, tw)).collect();
    let mut data = Vec::with_capacity(th * tw * d);
    for y in 0..th {
        let (y0, y1, fy) = source_coord(y, src.h, th);
        for &(x0, x1, fx) in &cols {
            let (a, b) = (src.at(y0, x0), src.at(y0, x1));
            let (c, e) = (src.at(y1, x0), src.at(y1, x1));
            for k in 0..d {
                let top = (1.0 - fx) * a[k] + fx * b[k];
                let bottom = (1.0 - fx) * c[k] + fx * e[k];
                data.push((1.0 - fy) * top + fy * bottom);
            }
        }
    }
    Ok(Grid {
        h: th,
        w: tw,
        d,
        data,
    })
}

/// Bilinear upsampling; refuses to shrink either dimension.
pub fn upsample_bilinear(src: &Grid, target: (usize, usize)) -> Result<Grid> {
    if target.0 < src.h || target.1 < src.w {
        return Err(Error::validation(format!(
            "upsample target {}x{} is smaller than source {}x{}",
            target.0, target.1, src.h, src.w
        )));
    }
    resample_bilinear(src, target)
}

/// Accumulated features `F_s` at the final resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    data: Grid,
    step: usize,
}

impl FeatureMap {
    pub fn new(data: Grid, step: usize) -> Result<Self> {
        if data.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("feature map has non-finite entries"));
        }
        Ok(Self { data, step })
    }

    /// `F_0`: the same channel vector at every position.
    pub fn initial(h: usize, w: usize, channels: &[f64]) -> Self {
        Self {
            data: Grid::broadcast(h, w, channels),
            step: 0,
        }
    }

    pub fn zeros(h: usize, w: usize, d: usize) -> Self {
        Self {
            data: Grid::zeros(h, w, d),
            step: 0,
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.data
    }

    pub fn step(&self) -> usize {
        self.step
    }
}

/// Quantized residual `R_s`: one bit per channel per position, dequantized to
/// `±gamma`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualMap {
    bits: Vec<u8>,
    values: Grid,
    gamma: f64,
}

impl ResidualMap {
    pub fn from_bits(h: usize, w: usize, d: usize, bits: Vec<u8>, gamma: f64) -> Result<Self> {
        if bits.len() != h * w * d {
            return Err(Error::shape("bit array length does not match grid"));
        }
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::validation("quantizer magnitude must be positive"));
        }
        let values = bits
            .iter()
            .map(|&b| gamma * (2.0 * f64::from(b) - 1.0))
            .collect();
        Ok(Self {
            bits,
            values: Grid {
                h,
                w,
                d,
                data: values,
            },
            gamma,
        })
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn values(&self) -> &Grid {
        &self.values
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Bits at one position packed little-endian into a codebook index
    /// (channel 0 is the least significant bit). Valid for `d <= 64`.
    pub fn code_at(&self, y: usize, x: usize) -> u64 {
        let d = self.values.d;
        let start = (y * self.values.w + x) * d;
        self.bits[start..start + d]
            .iter()
            .enumerate()
            .fold(0u64, |acc, (i, &b)| acc | (u64::from(b) << i))
    }
}

pub fn default_gamma(channels: usize) -> f64 {
    1.0 / (channels as f64).sqrt()
}

/// Sign quantizer: bit is 1 iff the raw value is `>= 0`.
pub fn quantize_bits(raw: &Grid, gamma: f64) -> Result<ResidualMap> {
    if raw.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::validation("cannot quantize non-finite values"));
    }
    let bits = raw.data.iter().map(|&v| u8::from(v >= 0.0)).collect();
    ResidualMap::from_bits(raw.h, raw.w, raw.d, bits, gamma)
}

/// `F_s = F_{s-1} + up_{H×W}(R_s)`.
pub fn accumulate(prev: &FeatureMap, residual: &ResidualMap, step: usize) -> Result<FeatureMap> {
    if step == 0 || prev.step + 1 != step {
        return Err(Error::state(format!(
            "accumulating step {step} onto feature map at step {}",
            prev.step
        )));
    }
    let (h, w, _) = prev.data.dims();
    let up = upsample_bilinear(&residual.values, (h, w))?;
    Ok(FeatureMap {
        data: prev.data.add(&up)?,
        step,
    })
}

/// Toy image decoder: `rgb = round(255 * logistic(M f + b))` per position.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    weights: Vec<f64>,
    bias: [f64; 3],
    channels: usize,
}

impl Decoder {
    pub fn new(weights: Vec<f64>, bias: [f64; 3]) -> Result<Self> {
        if weights.is_empty() || !weights.len().is_multiple_of(3) {
            return Err(Error::shape("decoder weights must be 3 x d"));
        }
        let channels = weights.len() / 3;
        Ok(Self {
            weights,
            bias,
            channels,
        })
    }

    /// `M` entries uniform in `[-1, 1)`, `b` uniform in `[-0.25, 0.25)`.
    pub fn seeded(seed: u64, channels: usize) -> Self {
        let mut r = rng::stream("storyscale/decoder", &[seed, channels as u64]);
        let weights = rng::uniform_vec(&mut r, 3 * channels, 1.0);
        let b = rng::uniform_vec(&mut r, 3, 0.25);
        Self {
            weights,
            bias: [b[0], b[1], b[2]],
            channels,
        }
    }

    pub fn decode(&self, features: &Grid) -> Result<ImageRaster> {
        let (h, w, d) = features.dims();
        if d != self.channels {
            return Err(Error::shape(format!(
                "decoder expects {} channels, features have {d}",
                self.channels
            )));
        }
        let mut pixels = Vec::with_capacity(h * w * 3);
        for y in 0..h {
            for x in 0..w {
                let f = features.at(y, x);
                for c in 0..3 {
                    let row = &self.weights[c * d..(c + 1) * d];
                    let z: f64 = row.iter().zip(f).map(|(m, v)| m * v).sum::<f64>() + self.bias[c];
                    pixels.push(to_byte(logistic(z)));
                }
            }
        }
        ImageRaster::new(w, h, pixels)
    }
}

pub fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// `round(255 * v)` with halves rounding up.
fn to_byte(v: f64) -> u8 {
    (255.0 * v + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Decodes `F_S`; `total_steps` must equal the feature map's step.
pub fn decode_image(final_map: &FeatureMap, total_steps: usize, seed: u64) -> Result<ImageRaster> {
    if final_map.step != total_steps {
        return Err(Error::state(format!(
            "decoding feature map at step {} but schedule has {total_steps} steps",
            final_map.step
        )));
    }
    Decoder::seeded(seed, final_map.data.d).decode(&final_map.data)
}
