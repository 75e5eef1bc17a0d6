//! Unified attention guidance and classifier-free guidance.
//!
//! During early steps every follower sample's self-attention keys are
//! replaced by the reference's, and its values are pulled toward the
//! reference's by `V̄ = α·V_n + (1 − α)·V_ref` with
//! `α = λ · clamp(cos(V_ref, V_n), 0, 1)`. The conditional pass computes and
//! records α; the unconditional pass reuses the recorded values so both
//! branches stay in step for the guidance combine. The reference sample (slot
//! 0) is never touched.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalewise::Grid;
use crate::transformer::{AttentionHook, AttentionState, Branch, HookContext};

pub const DEFAULT_LAMBDA: f64 = 0.85;
pub const DEFAULT_CFG_SCALE: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaScope {
    /// α is computed in every self-attention layer.
    #[default]
    PerLayer,
    /// α is computed in the first layer of a step and reused by the others.
    PerStep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub lambda: f64,
    pub early_steps: BTreeSet<usize>,
    pub cfg_scale: f64,
    pub enable_ipr: bool,
    pub enable_asi: bool,
    pub enable_sga: bool,
    #[serde(default)]
    pub alpha_scope: AlphaScope,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            early_steps: [2, 3].into_iter().collect(),
            cfg_scale: DEFAULT_CFG_SCALE,
            enable_ipr: true,
            enable_asi: true,
            enable_sga: true,
            alpha_scope: AlphaScope::PerLayer,
        }
    }
}

impl GuidanceConfig {
    /// All three mechanisms off; plain CFG generation.
    pub fn disabled() -> Self {
        Self {
            enable_ipr: false,
            enable_asi: false,
            enable_sga: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::validation(format!(
                "lambda must lie in [0, 1], got {}",
                self.lambda
            )));
        }
        if !(self.cfg_scale >= 0.0 && self.cfg_scale.is_finite()) {
            return Err(Error::validation(format!(
                "cfg scale must be finite and non-negative, got {}",
                self.cfg_scale
            )));
        }
        if self.enable_sga && !self.enable_asi {
            return Err(Error::validation(
                "synchronized guidance adaptation requires adaptive style injection",
            ));
        }
        Ok(())
    }

    pub fn any_attention_guidance(&self) -> bool {
        self.enable_asi || self.enable_sga
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaRecord {
    pub step: usize,
    pub layer: usize,
    pub sample_index: usize,
    pub alpha: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine similarity of two equally sized vectors; errors on zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(format!(
            "cosine of vectors of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate("cosine of a zero-norm vector".into()));
    }
    Ok(dot(a, b) / (na * nb))
}

/// `α = λ · clamp(cos(V_ref, V_n), 0, 1)` over the flattened value arrays.
pub fn compute_alpha(v_ref: &[f64], v_n: &[f64], lambda: f64) -> Result<f64> {
    Ok(lambda * cosine(v_ref, v_n)?.clamp(0.0, 1.0))
}

fn blend_values(v_n: &[f64], v_ref: &[f64], alpha: f64) -> Vec<f64> {
    let beta = 1.0 - alpha;
    v_n.iter()
        .zip(v_ref)
        .map(|(a, r)| alpha * a + beta * r)
        .collect()
}

fn check_batch(states: &[AttentionState]) -> Result<()> {
    let Some(reference) = states.first() else {
        return Err(Error::state("no reference attention state"));
    };
    if states.iter().any(|s| !s.same_shape(reference)) {
        return Err(Error::shape(
            "attention states differ in shape across the batch",
        ));
    }
    Ok(())
}

/// Applies the key swap and value blend to followers with the given alphas
/// (`alphas[0]` belongs to the reference and is ignored).
fn inject(states: &mut [AttentionState], alphas: &[f64]) {
    let (reference, followers) = states.split_first_mut().expect("checked non-empty");
    for (state, &alpha) in followers.iter_mut().zip(&alphas[1..]) {
        state.k.clone_from(&reference.k);
        state.v = blend_values(&state.v, &reference.v, alpha);
        state.recorded_alpha = Some(alpha);
    }
}

/// Conditional-branch injection. Computes α for each follower (the reference
/// gets exactly λ), rewrites follower K/V, and returns one record per sample.
pub fn inject_style_conditional(
    states: &mut [AttentionState],
    lambda: f64,
) -> Result<Vec<AlphaRecord>> {
    check_batch(states)?;
    let mut alphas = Vec::with_capacity(states.len());
    alphas.push(lambda);
    for state in &states[1..] {
        alphas.push(compute_alpha(&states[0].v, &state.v, lambda)?);
    }
    inject_style_with_alphas(states, &alphas)
}

/// Conditional-branch injection with externally supplied α values.
pub fn inject_style_with_alphas(
    states: &mut [AttentionState],
    alphas: &[f64],
) -> Result<Vec<AlphaRecord>> {
    check_batch(states)?;
    if alphas.len() != states.len() {
        return Err(Error::shape("one alpha per sample required"));
    }
    inject(states, alphas);
    states[0].recorded_alpha = Some(alphas[0]);
    Ok(states
        .iter()
        .zip(alphas)
        .map(|(s, &alpha)| AlphaRecord {
            step: s.step,
            layer: s.layer,
            sample_index: s.sample_index,
            alpha,
        })
        .collect())
}

/// Unconditional-branch injection reusing the conditional pass's α. Every
/// follower must have a record for this state's `(step, layer)`.
pub fn inject_style_unconditional(
    states: &mut [AttentionState],
    records: &[AlphaRecord],
) -> Result<Vec<f64>> {
    check_batch(states)?;
    let mut alphas = Vec::with_capacity(states.len());
    for (slot, state) in states.iter().enumerate() {
        let found = records.iter().find(|r| {
            r.step == state.step && r.layer == state.layer && r.sample_index == state.sample_index
        });
        match found {
            Some(r) => alphas.push(r.alpha),
            None if slot == 0 => alphas.push(f64::NAN),
            None => {
                return Err(Error::Synchronization(format!(
                    "no conditional alpha for step {} layer {} sample {}",
                    state.step, state.layer, state.sample_index
                )))
            }
        }
    }
    inject(states, &alphas);
    Ok(alphas)
}

/// `guided = w·cond + (1 − w)·uncond`, i.e. `uncond + w·(cond − uncond)`.
/// Written in this form so `w = 0` and `w = 1` return the inputs exactly.
pub fn apply_cfg(cond: &Grid, uncond: &Grid, w: f64) -> Result<Grid> {
    if cond.dims() != uncond.dims() {
        return Err(Error::shape(format!(
            "cfg inputs differ: {:?} vs {:?}",
            cond.dims(),
            uncond.dims()
        )));
    }
    if w.is_nan() || w < 0.0 {
        return Err(Error::validation("cfg scale must be non-negative"));
    }
    let (h, wd, d) = cond.dims();
    let beta = 1.0 - w;
    let data = cond
        .data()
        .iter()
        .zip(uncond.data())
        .map(|(c, u)| w * c + beta * u)
        .collect();
    Grid::new(h, wd, d, data)
}

/// Attention hook running style injection on the conditional branch and
/// synchronized adaptation on the unconditional branch, gated to the early
/// steps. Batches of one sample pass through untouched.
#[derive(Debug, Clone)]
pub struct GuidanceHook {
    config: GuidanceConfig,
    recorded: BTreeMap<(usize, usize), Vec<AlphaRecord>>,
    consumed: Vec<AlphaRecord>,
}

impl GuidanceHook {
    pub fn new(config: GuidanceConfig) -> Self {
        Self {
            config,
            recorded: BTreeMap::new(),
            consumed: Vec::new(),
        }
    }

    pub fn config(&self) -> &GuidanceConfig {
        &self.config
    }

    /// Records emitted by the conditional branch, ordered by step, layer,
    /// then batch slot.
    pub fn records(&self) -> Vec<AlphaRecord> {
        self.recorded.values().flatten().copied().collect()
    }

    /// α values actually used by the unconditional branch (followers only).
    pub fn consumed(&self) -> &[AlphaRecord] {
        &self.consumed
    }

    pub fn into_records(self) -> Vec<AlphaRecord> {
        self.recorded.into_values().flatten().collect()
    }
}

impl AttentionHook for GuidanceHook {
    fn on_self_attention(
        &mut self,
        ctx: &HookContext,
        states: &mut [AttentionState],
    ) -> Result<()> {
        if states.len() < 2 || !self.config.early_steps.contains(&ctx.step) {
            return Ok(());
        }
        match ctx.branch {
            Branch::Conditional => {
                if !self.config.enable_asi {
                    return Ok(());
                }
                let reuse = match self.config.alpha_scope {
                    AlphaScope::PerStep if ctx.layer > 0 => self
                        .recorded
                        .get(&(ctx.step, 0))
                        .map(|r| r.iter().map(|a| a.alpha).collect::<Vec<_>>()),
                    _ => None,
                };
                let records = match reuse {
                    Some(alphas) => inject_style_with_alphas(states, &alphas)?,
                    None => inject_style_conditional(states, self.config.lambda)?,
                };
                self.recorded.insert((ctx.step, ctx.layer), records);
            }
            Branch::Unconditional => {
                if !self.config.enable_sga {
                    return Ok(());
                }
                let records = self.recorded.get(&(ctx.step, ctx.layer)).ok_or_else(|| {
                    Error::Synchronization(format!(
                        "unconditional pass at step {} layer {} ran before the conditional pass",
                        ctx.step, ctx.layer
                    ))
                })?;
                let alphas = inject_style_unconditional(states, records)?;
                for (state, alpha) in states.iter().zip(alphas).skip(1) {
                    self.consumed.push(AlphaRecord {
                        step: ctx.step,
                        layer: ctx.layer,
                        sample_index: state.sample_index,
                        alpha,
                    });
                }
            }
        }
        Ok(())
    }
}
