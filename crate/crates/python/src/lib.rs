//! Python bindings for `storyscale`.
//!
//! Configuration is passed as keyword overrides on top of the same run
//! config the CLI uses, so Python and the command line accept identical keys.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

use storyscale::config::RunConfig;
use storyscale::image::ImageRaster;
use storyscale::metrics::{self, ScoreSet};
use storyscale::orchestrator::{self, StoryAlphaRecord};
use storyscale::prompt::{self, EmbeddingBatch, EmbeddingBlock, EmbeddingPair, StorySpec};
use storyscale::scalewise::{self, Grid};

create_exception!(storyscale, StoryscaleError, PyException);

fn err(e: storyscale::Error) -> PyErr {
    StoryscaleError::new_err(e.to_string())
}

fn json_err(e: serde_json::Error) -> PyErr {
    StoryscaleError::new_err(e.to_string())
}

#[pyclass(name = "StorySpec", module = "storyscale", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyStorySpec {
    inner: StorySpec,
}

#[pymethods]
impl PyStorySpec {
    #[new]
    #[pyo3(signature = (identity, expressions, seed=None))]
    fn new(identity: String, expressions: Vec<String>, seed: Option<u64>) -> PyResult<Self> {
        let mut inner = StorySpec::new(identity, expressions).map_err(err)?;
        inner.seed = seed;
        Ok(Self { inner })
    }

    /// Parses a TOML story document.
    #[staticmethod]
    fn from_toml(document: &str) -> PyResult<Self> {
        Ok(Self {
            inner: prompt::parse_story_spec(document).map_err(err)?,
        })
    }

    #[getter]
    fn identity(&self) -> String {
        self.inner.identity.clone()
    }

    #[getter]
    fn expressions(&self) -> Vec<String> {
        self.inner.expressions.clone()
    }

    /// Full text of prompt `index` (1-based).
    fn prompt_text(&self, index: usize) -> PyResult<String> {
        if index == 0 || index > self.inner.len() {
            return Err(StoryscaleError::new_err(format!(
                "prompt index {index} out of range"
            )));
        }
        Ok(self.inner.prompt_text(index))
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "StorySpec({:?}, {} expressions)",
            self.inner.identity,
            self.inner.len()
        )
    }
}

#[pyclass(name = "Image", module = "storyscale", frozen, from_py_object)]
#[derive(Clone)]
struct PyImage {
    inner: ImageRaster,
}

#[pymethods]
impl PyImage {
    #[new]
    fn new(width: usize, height: usize, pixels: Vec<u8>) -> PyResult<Self> {
        Ok(Self {
            inner: ImageRaster::new(width, height, pixels).map_err(err)?,
        })
    }

    #[staticmethod]
    fn read_ppm(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: ImageRaster::read_ppm(&path).map_err(err)?,
        })
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }

    /// Row-major RGB bytes.
    fn pixels<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, self.inner.pixels())
    }

    fn to_ppm<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.inner.to_ppm())
    }

    /// Writes a binary PPM and returns its SHA-256.
    fn write_ppm(&self, path: PathBuf) -> PyResult<String> {
        self.inner.write_ppm(&path).map_err(err)
    }

    fn digest(&self) -> String {
        self.inner.digest()
    }

    fn toy_embedding(&self) -> Vec<f64> {
        metrics::toy_embed_image(&self.inner)
    }

    fn __repr__(&self) -> String {
        format!(
            "Image({}x{}, {})",
            self.inner.width(),
            self.inner.height(),
            &self.inner.digest()[..12]
        )
    }
}

#[pyclass(
    name = "AlphaRecord",
    module = "storyscale",
    frozen,
    get_all,
    skip_from_py_object
)]
#[derive(Clone)]
struct PyAlphaRecord {
    batch: usize,
    prompt_index: usize,
    slot: usize,
    step: usize,
    layer: usize,
    alpha: f64,
}

impl From<&StoryAlphaRecord> for PyAlphaRecord {
    fn from(r: &StoryAlphaRecord) -> Self {
        Self {
            batch: r.batch,
            prompt_index: r.prompt_index,
            slot: r.slot,
            step: r.step,
            layer: r.layer,
            alpha: r.alpha,
        }
    }
}

#[pymethods]
impl PyAlphaRecord {
    fn __repr__(&self) -> String {
        format!(
            "AlphaRecord(prompt={}, step={}, layer={}, alpha={})",
            self.prompt_index, self.step, self.layer, self.alpha
        )
    }
}

#[pyclass(name = "Story", module = "storyscale", frozen, get_all)]
struct PyStory {
    images: Vec<PyImage>,
    batches: Vec<Vec<usize>>,
    anchor_digests: Vec<String>,
    alpha_records: Vec<PyAlphaRecord>,
}

fn run_config(
    py: Python<'_>,
    config: Option<&str>,
    overrides: Option<&Bound<'_, PyDict>>,
) -> PyResult<RunConfig> {
    let base = match config {
        Some(text) => RunConfig::from_toml(text).map_err(err)?,
        None => RunConfig::default(),
    };
    let Some(overrides) = overrides else {
        return Ok(base);
    };
    if let Some(v) = overrides.get_item("lambda_")? {
        overrides.set_item("lambda", v)?;
        overrides.del_item("lambda_")?;
    }
    let mut value = serde_json::to_value(&base).map_err(json_err)?;
    let text: String = py
        .import("json")?
        .call_method1("dumps", (overrides,))?
        .extract()?;
    let patch: serde_json::Value = serde_json::from_str(&text).map_err(json_err)?;
    if let (Some(target), Some(patch)) = (value.as_object_mut(), patch.as_object()) {
        for (k, v) in patch {
            target.insert(k.clone(), v.clone());
        }
    }
    serde_json::from_value(value).map_err(json_err)
}

/// Generates a story. `config` is an optional TOML run config; keyword
/// arguments override its keys, e.g. `generate(spec, seed=3, lambda_=0.6)`
/// (`lambda_` stands in for the reserved word).
#[pyfunction]
#[pyo3(signature = (story, config=None, **overrides))]
fn generate(
    py: Python<'_>,
    story: &PyStorySpec,
    config: Option<&str>,
    overrides: Option<&Bound<'_, PyDict>>,
) -> PyResult<PyStory> {
    let gen = run_config(py, config, overrides)?
        .generation_config()
        .map_err(err)?;
    let spec = story.inner.clone();
    let out = py
        .detach(move || orchestrator::generate_story(&spec, &gen))
        .map_err(err)?;
    Ok(PyStory {
        images: out
            .images
            .into_iter()
            .map(|i| PyImage { inner: i.raster })
            .collect(),
        batches: out.plan.batches,
        anchor_digests: out.anchor_digests,
        alpha_records: out.alpha_records.iter().map(PyAlphaRecord::from).collect(),
    })
}

/// Generates a story into `out_dir` exactly as the `generate` command does
/// and returns the manifest as a JSON string.
#[pyfunction]
#[pyo3(signature = (story_path, out_dir, config=None, **overrides))]
fn generate_to_dir(
    py: Python<'_>,
    story_path: PathBuf,
    out_dir: PathBuf,
    config: Option<&str>,
    overrides: Option<&Bound<'_, PyDict>>,
) -> PyResult<String> {
    let mut cfg = run_config(py, config, overrides)?;
    cfg.story = Some(story_path);
    cfg.out = Some(out_dir);
    let manifest = py
        .detach(move || storyscale::cli::cmd_generate(&cfg))
        .map_err(err)?;
    serde_json::to_string_pretty(&manifest).map_err(json_err)
}

#[pyfunction]
fn harmonic_score(clip_t: f64, clip_i: f64, dreamsim: f64, dino: f64) -> PyResult<f64> {
    metrics::harmonic_score(&ScoreSet::new(clip_t, clip_i, dreamsim, dino)).map_err(err)
}

#[pyfunction]
fn pairwise_mean_similarity(vectors: Vec<Vec<f64>>) -> PyResult<f64> {
    metrics::pairwise_mean_similarity(&vectors).map_err(err)
}

#[pyfunction]
fn text_image_score(image_vec: Vec<f64>, text_vec: Vec<f64>) -> PyResult<f64> {
    metrics::text_image_score(&image_vec, &text_vec).map_err(err)
}

/// Scores a list of images against their prompts with the toy embedders.
/// Returns the report as a JSON string.
#[pyfunction]
#[pyo3(signature = (images, prompts, noise_seed=0))]
fn evaluate(images: Vec<PyImage>, prompts: Vec<String>, noise_seed: u64) -> PyResult<String> {
    let rasters: Vec<ImageRaster> = images.into_iter().map(|i| i.inner).collect();
    let report = metrics::evaluate_run(
        &rasters,
        &prompts,
        None,
        &metrics::Embedders::default(),
        &metrics::EvaluationConfig { noise_seed },
    )
    .map_err(err)?;
    serde_json::to_string_pretty(&report).map_err(json_err)
}

type Rows = Vec<Vec<f64>>;
type BlockPair = (Rows, Rows);

/// Identity prompt replacement over `[(identity_rows, expression_rows), ...]`
/// where each block is a list of equal-width rows.
#[pyfunction]
fn identity_replacement(entries: Vec<BlockPair>) -> PyResult<Vec<BlockPair>> {
    let width = entries
        .iter()
        .flat_map(|(a, b)| a.iter().chain(b))
        .map(Vec::len)
        .next()
        .unwrap_or(0);
    let to_block = |rows: &[Vec<f64>]| {
        if rows.iter().any(|r| r.len() != width) {
            return Err(StoryscaleError::new_err(
                "all rows must have the same width",
            ));
        }
        EmbeddingBlock::new(rows.len(), width, rows.concat()).map_err(err)
    };
    let pairs = entries
        .iter()
        .map(|(i, e)| {
            Ok(EmbeddingPair {
                identity: to_block(i)?,
                expression: to_block(e)?,
            })
        })
        .collect::<PyResult<Vec<_>>>()?;
    let out = prompt::apply_identity_replacement(&EmbeddingBatch::new(pairs).map_err(err)?)
        .map_err(err)?;
    let rows = |b: &EmbeddingBlock| (0..b.token_count()).map(|r| b.row(r).to_vec()).collect();
    Ok(out
        .entries()
        .iter()
        .map(|p| (rows(&p.identity), rows(&p.expression)))
        .collect())
}

/// Half-pixel bilinear resampling of a row-major `h × w × d` array.
#[pyfunction]
fn resample_bilinear(
    data: Vec<f64>,
    h: usize,
    w: usize,
    d: usize,
    target_h: usize,
    target_w: usize,
) -> PyResult<Vec<f64>> {
    let g = Grid::new(h, w, d, data).map_err(err)?;
    Ok(scalewise::resample_bilinear(&g, (target_h, target_w))
        .map_err(err)?
        .into_data())
}

#[pymodule]
#[pyo3(name = "storyscale")]
fn storyscale_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    init_module(m)
}

/// Registers every binding on `m`; also used to embed the module.
pub fn init_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("StoryscaleError", m.py().get_type::<StoryscaleError>())?;
    m.add_class::<PyStorySpec>()?;
    m.add_class::<PyImage>()?;
    m.add_class::<PyAlphaRecord>()?;
    m.add_class::<PyStory>()?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(generate_to_dir, m)?)?;
    m.add_function(wrap_pyfunction!(harmonic_score, m)?)?;
    m.add_function(wrap_pyfunction!(pairwise_mean_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(text_image_score, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(identity_replacement, m)?)?;
    m.add_function(wrap_pyfunction!(resample_bilinear, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
