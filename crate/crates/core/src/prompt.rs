//! Story specifications, the toy prompt encoder, and identity prompt
//! replacement.
//!
//! A story is one identity prompt shared by N expression prompts. Each prompt
//! is encoded into two blocks of token rows: the identity block and the
//! expression block. Identity replacement swaps every sample's identity block
//! for the reference sample's block and rescales the expression block by the
//! ratio of identity magnitudes, so that identity-to-expression proportions
//! are kept while the identity representation becomes uniform.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::derive_seed_with_bytes;

pub const DEFAULT_TEXT_WIDTH: usize = 32;

const KNOWN_FIELDS: [&str; 3] = ["identity", "expressions", "seed"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StorySpec {
    pub identity: String,
    pub expressions: Vec<String>,
    /// Per-story override of the encoder seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl StorySpec {
    pub fn new(identity: impl Into<String>, expressions: Vec<String>) -> Result<Self> {
        let spec = Self {
            identity: identity.into(),
            expressions,
            seed: None,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.identity.trim().is_empty() {
            return Err(Error::validation("identity prompt is empty"));
        }
        if self.expressions.is_empty() {
            return Err(Error::validation("story has no expression prompts"));
        }
        Ok(())
    }

    /// Number of prompts N.
    pub fn len(&self) -> usize {
        self.expressions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.expressions.is_empty()
    }

    /// Full text of prompt `index` (1-based): identity followed by expression.
    pub fn prompt_text(&self, index: usize) -> String {
        let exp = self.expressions[index - 1].trim();
        if exp.is_empty() {
            self.identity.trim().to_string()
        } else {
            format!("{} {}", self.identity.trim(), exp)
        }
    }
}

fn line_of(doc: &str, offset: usize) -> usize {
    doc[..offset.min(doc.len())].matches('\n').count() + 1
}

/// Parses a TOML story file, returning the spec and any unknown top-level
/// field names (which are ignored).
pub fn parse_story_spec_detailed(document: &str) -> Result<(StorySpec, Vec<String>)> {
    let table: toml::Table = toml::from_str(document).map_err(|e| Error::Parse {
        line: e.span().map(|s| line_of(document, s.start)).unwrap_or(1),
        message: e.message().trim().to_string(),
    })?;

    // Line lookup for semantic errors on a present key.
    let key_line = |key: &str| {
        document
            .lines()
            .position(|l| {
                let t = l.trim_start();
                t.starts_with(key) && t[key.len()..].trim_start().starts_with('=')
            })
            .map(|i| i + 1)
            .unwrap_or(1)
    };

    let identity = match table.get("identity") {
        Some(toml::Value::String(s)) => s.clone(),
        Some(_) => {
            return Err(Error::Parse {
                line: key_line("identity"),
                message: "`identity` must be a string".into(),
            })
        }
        None => {
            return Err(Error::Parse {
                line: 1,
                message: "missing required field `identity`".into(),
            })
        }
    };

    let expressions = match table.get("expressions") {
        Some(toml::Value::Array(items)) => {
            let mut out = Vec::with_capacity(items.len());
            for item in items {
                match item {
                    toml::Value::String(s) => out.push(s.clone()),
                    _ => {
                        return Err(Error::Parse {
                            line: key_line("expressions"),
                            message: "`expressions` must contain only strings".into(),
                        })
                    }
                }
            }
            out
        }
        Some(_) => {
            return Err(Error::Parse {
                line: key_line("expressions"),
                message: "`expressions` must be an array of strings".into(),
            })
        }
        None => {
            return Err(Error::Parse {
                line: 1,
                message: "missing required field `expressions`".into(),
            })
        }
    };

    let seed = match table.get("seed") {
        None => None,
        Some(toml::Value::Integer(v)) if *v >= 0 => Some(*v as u64),
        Some(_) => {
            return Err(Error::Parse {
                line: key_line("seed"),
                message: "`seed` must be a non-negative integer".into(),
            })
        }
    };

    let unknown: Vec<String> = table
        .keys()
        .filter(|k| !KNOWN_FIELDS.contains(&k.as_str()))
        .cloned()
        .collect();

    let spec = StorySpec {
        identity,
        expressions,
        seed,
    };
    spec.validate()?;
    Ok((spec, unknown))
}

/// Parses a story file. Unknown fields are logged as a warning and ignored.
pub fn parse_story_spec(document: &str) -> Result<StorySpec> {
    let (spec, unknown) = parse_story_spec_detailed(document)?;
    if !unknown.is_empty() {
        log::warn!("ignoring unknown story fields: {}", unknown.join(", "));
    }
    Ok(spec)
}

/// A block of token embeddings, one row per token.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBlock {
    rows: usize,
    width: usize,
    data: Vec<f64>,
}

impl EmbeddingBlock {
    pub fn new(rows: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * width {
            return Err(Error::shape(format!(
                "embedding block {rows}x{width} given {} values",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("embedding block has non-finite entries"));
        }
        Ok(Self { rows, width, data })
    }

    pub fn empty(width: usize) -> Self {
        Self {
            rows: 0,
            width,
            data: Vec::new(),
        }
    }

    pub fn token_count(&self) -> usize {
        self.rows
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.width..(i + 1) * self.width]
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            rows: self.rows,
            width: self.width,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    /// Rows of `self` followed by rows of `other`.
    pub fn concat(&self, other: &EmbeddingBlock) -> Result<Self> {
        if self.width != other.width {
            return Err(Error::shape("cannot concatenate blocks of different width"));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Self {
            rows: self.rows + other.rows,
            width: self.width,
            data,
        })
    }

    /// Column-wise mean of the rows; zeros for an empty block.
    pub fn mean_row(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.width];
        if self.rows == 0 {
            return mean;
        }
        for r in 0..self.rows {
            for (m, v) in mean.iter_mut().zip(self.row(r)) {
                *m += v;
            }
        }
        let inv = 1.0 / self.rows as f64;
        mean.iter_mut().for_each(|m| *m *= inv);
        mean
    }
}

/// Frobenius norm of a block; 0 for an empty block.
pub fn block_norm(block: &EmbeddingBlock) -> f64 {
    block.data.iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingPair {
    pub identity: EmbeddingBlock,
    pub expression: EmbeddingBlock,
}

impl EmbeddingPair {
    /// The full prompt sequence: identity rows then expression rows.
    pub fn sequence(&self) -> EmbeddingBlock {
        self.identity
            .concat(&self.expression)
            .expect("pair blocks share width")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    entries: Vec<EmbeddingPair>,
    replaced: bool,
}

impl EmbeddingBatch {
    pub fn new(entries: Vec<EmbeddingPair>) -> Result<Self> {
        let Some(first) = entries.first() else {
            return Err(Error::validation("embedding batch is empty"));
        };
        let width = first.identity.width();
        if entries
            .iter()
            .any(|e| e.identity.width() != width || e.expression.width() != width)
        {
            return Err(Error::shape("embedding batch entries differ in width"));
        }
        Ok(Self {
            entries,
            replaced: false,
        })
    }

    pub fn entries(&self) -> &[EmbeddingPair] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_replaced(&self) -> bool {
        self.replaced
    }

    pub fn width(&self) -> usize {
        self.entries[0].identity.width()
    }
}

/// Toy text encoder: every whitespace token maps to a seeded unit vector.
///
/// Tokens are not contextualized, so the same token yields the same row
/// wherever it appears.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptEncoder {
    pub seed: u64,
    pub width: usize,
}

impl PromptEncoder {
    pub fn new(seed: u64, width: usize) -> Self {
        Self { seed, width }
    }

    pub fn token_vector(&self, token: &str) -> Vec<f64> {
        let seed = derive_seed_with_bytes(
            "storyscale/token",
            &[self.seed, self.width as u64],
            token.as_bytes(),
        );
        let mut rng = ChaCha8Rng::from_seed(seed);
        let mut v: Vec<f64> = (0..self.width)
            .map(|_| rng.random::<f64>() * 2.0 - 1.0)
            .collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        } else if let Some(first) = v.first_mut() {
            *first = 1.0;
        }
        v
    }

    pub fn encode_text(&self, text: &str) -> EmbeddingBlock {
        let mut data = Vec::new();
        let mut rows = 0;
        for token in text.split_whitespace() {
            data.extend(self.token_vector(token));
            rows += 1;
        }
        EmbeddingBlock {
            rows,
            width: self.width,
            data,
        }
    }

    /// Encodes prompt `index` (1-based) of a story into its identity and
    /// expression blocks.
    pub fn encode_prompt(&self, spec: &StorySpec, index: usize) -> Result<EmbeddingPair> {
        if index == 0 || index > spec.len() {
            return Err(Error::validation(format!(
                "prompt index {index} outside 1..={}",
                spec.len()
            )));
        }
        Ok(EmbeddingPair {
            identity: self.encode_text(&spec.identity),
            expression: self.encode_text(&spec.expressions[index - 1]),
        })
    }
}

/// Replaces every identity block with the reference's (entry 0) and rescales
/// each expression block by `|T_iden^ref| / |T_iden^n|`.
pub fn apply_identity_replacement(batch: &EmbeddingBatch) -> Result<EmbeddingBatch> {
    if batch.replaced {
        return Err(Error::state("identity replacement already applied"));
    }
    let reference = &batch.entries[0];
    let ref_norm = block_norm(&reference.identity);
    if ref_norm <= 0.0 {
        return Err(Error::Degenerate(
            "reference identity block has zero norm".into(),
        ));
    }

    let mut entries = Vec::with_capacity(batch.entries.len());
    entries.push(reference.clone());
    for (n, entry) in batch.entries.iter().enumerate().skip(1) {
        let norm = block_norm(&entry.identity);
        if norm <= 0.0 {
            return Err(Error::Degenerate(format!(
                "identity block of entry {} has zero norm",
                n + 1
            )));
        }
        entries.push(EmbeddingPair {
            identity: reference.identity.clone(),
            expression: entry.expression.scaled(ref_norm / norm),
        });
    }
    Ok(EmbeddingBatch {
        entries,
        replaced: true,
    })
}
