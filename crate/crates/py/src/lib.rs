//! Python bindings: tokenizer, feature store, models, merging, evaluation.

use std::path::PathBuf;

use pyo3::exceptions::{PyFileExistsError, PyIOError, PyKeyError, PyValueError};
use pyo3::prelude::*;

use tinyvlm_core as tv;
use tv::checkpoint::{load_checkpoint, write_checkpoint, CheckpointMeta, Modality};
use tv::eval::{evaluate_file, Correlation, EvalContext, EvalOptions, TaskType, TextConditioning};
use tv::tokenizer::{SpecialNames, TokenId};
use tv::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::UnknownKey(_) => PyKeyError::new_err(e.to_string()),
        Error::AlreadyExists(_) => PyFileExistsError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

#[pyclass(name = "Tokenizer", module = "tinyvlm", frozen)]
struct PyTokenizer {
    inner: tv::Tokenizer,
}

#[pymethods]
impl PyTokenizer {
    #[staticmethod]
    fn train(corpus: Vec<String>, vocab_size: usize) -> PyResult<Self> {
        let inner = tv::train_bpe(corpus.iter().map(String::as_str), vocab_size, &SpecialNames::default())
            .map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: tv::Tokenizer::load(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(py_err)
    }

    fn encode(&self, text: &str) -> Vec<TokenId> {
        self.inner.encode(text)
    }

    fn decode(&self, ids: Vec<TokenId>) -> PyResult<String> {
        self.inner.decode(&ids).map_err(py_err)
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.vocab_size()
    }

    fn hash(&self) -> String {
        self.inner.hash()
    }

    /// Special token ids as a dict keyed by role.
    fn specials(&self) -> std::collections::BTreeMap<&'static str, TokenId> {
        let s = self.inner.specials();
        [("pad", s.pad), ("bos", s.bos), ("eos", s.eos), ("unk", s.unk), ("img", s.img)]
            .into_iter()
            .collect()
    }
}

#[pyclass(name = "FeatureStore", module = "tinyvlm", frozen)]
struct PyFeatureStore {
    inner: tv::FeatureStore,
}

#[pymethods]
impl PyFeatureStore {
    #[staticmethod]
    fn open(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: tv::open_store(&path).map_err(py_err)?,
        })
    }

    /// Writes a store from a dict of key to vector; the placeholder key is required.
    #[staticmethod]
    fn write(entries: std::collections::BTreeMap<String, Vec<f32>>, dim: usize, path: PathBuf) -> PyResult<()> {
        tv::features::write_store(&entries, dim, &path).map_err(py_err)
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn keys(&self) -> Vec<String> {
        self.inner.keys().map(str::to_string).collect()
    }

    fn get(&self, key: &str) -> PyResult<Vec<f32>> {
        Ok(self.inner.get(key).map_err(py_err)?.to_vec())
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

#[pyclass(name = "Model", module = "tinyvlm", frozen)]
struct PyModel {
    params: tv::ParameterSet<f32>,
    meta: Option<CheckpointMeta>,
}

fn parse_config(json: &str) -> PyResult<tv::ModelConfig> {
    let cfg: tv::ModelConfig = serde_json::from_str(json).map_err(|e| PyValueError::new_err(e.to_string()))?;
    cfg.validate().map_err(py_err)?;
    Ok(cfg)
}

#[pymethods]
impl PyModel {
    /// Randomly initialized model from a JSON config (`ModelConfig` field names).
    #[staticmethod]
    fn init(config_json: &str) -> PyResult<Self> {
        let cfg = parse_config(config_json)?;
        Ok(Self {
            params: tv::init_model(&cfg).map_err(py_err)?,
            meta: None,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (params, meta) = load_checkpoint(&path).map_err(py_err)?;
        Ok(Self {
            params,
            meta: Some(meta),
        })
    }

    /// Saves as an inference checkpoint. `modality` is `text_only` or `multimodal`.
    #[pyo3(signature = (path, tokenizer_hash, modality="text_only", words_seen=0, overwrite=false))]
    fn save(&self, path: PathBuf, tokenizer_hash: String, modality: &str, words_seen: u64, overwrite: bool) -> PyResult<()> {
        let modality = match modality {
            "text_only" => Modality::TextOnly,
            "multimodal" => Modality::Multimodal,
            other => return Err(PyValueError::new_err(format!("unsupported modality `{other}`"))),
        };
        let meta = CheckpointMeta {
            words_seen,
            modality,
            seed: self.params.config.seed,
            tokenizer_hash,
            merge_info: None,
        };
        write_checkpoint(&self.params, &meta, None, &path, overwrite).map_err(py_err)
    }

    #[getter]
    fn n_params(&self) -> usize {
        self.params.n_params()
    }

    fn config_json(&self) -> String {
        serde_json::to_string(&self.params.config).expect("config serializes")
    }

    /// Checkpoint metadata as JSON, or `None` for a freshly initialized model.
    fn meta_json(&self) -> Option<String> {
        self.meta.as_ref().map(|m| serde_json::to_string(m).expect("meta serializes"))
    }

    /// Ordered `(name, shape)` pairs.
    fn shape_manifest(&self) -> Vec<(String, Vec<usize>)> {
        self.params.shape_manifest().into_iter().collect()
    }

    fn tensor(&self, name: &str) -> PyResult<Vec<f32>> {
        self.params
            .get(name)
            .map(|t| t.data.clone())
            .ok_or_else(|| PyKeyError::new_err(name.to_string()))
    }

    /// Next-token logits, one row per position.
    #[pyo3(signature = (ids, feature=None))]
    fn logits(&self, ids: Vec<TokenId>, feature: Option<Vec<f32>>) -> PyResult<Vec<Vec<f32>>> {
        let l = tv::forward(&self.params, &ids, feature.as_deref()).map_err(py_err)?;
        Ok((0..l.positions).map(|t| l.row(t).to_vec()).collect())
    }

    /// Summed log-probability of the tokens after the BOS/IMG prefix.
    #[pyo3(signature = (ids, feature=None))]
    fn sentence_logprob(&self, ids: Vec<TokenId>, feature: Option<Vec<f32>>) -> PyResult<f64> {
        tv::sentence_logprob(&self.params, &ids, feature.as_deref()).map_err(py_err)
    }
}

/// Writes one merged checkpoint per alpha and returns their paths.
#[pyfunction]
#[pyo3(signature = (llm, vlm, alphas, out_dir, overwrite=false))]
fn merge_checkpoints(llm: PathBuf, vlm: PathBuf, alphas: Vec<f64>, out_dir: PathBuf, overwrite: bool) -> PyResult<Vec<PathBuf>> {
    tv::merge_sweep(&alphas, &llm, &vlm, &out_dir, overwrite).map_err(py_err)
}

/// Evaluates a checkpoint on a JSONL task file and returns the report as JSON.
#[pyfunction]
#[pyo3(signature = (ckpt, tokenizer, task, task_type, features=None, no_image=false, pearson=false))]
fn evaluate(
    ckpt: PathBuf,
    tokenizer: PathBuf,
    task: PathBuf,
    task_type: &str,
    features: Option<PathBuf>,
    no_image: bool,
    pearson: bool,
) -> PyResult<String> {
    let task_type: TaskType = task_type.parse().map_err(py_err)?;
    let tok = tv::Tokenizer::load(&tokenizer).map_err(py_err)?;
    let store = features.map(|p| tv::open_store(&p)).transpose().map_err(py_err)?;
    let (params, _) = load_checkpoint(&ckpt).map_err(py_err)?;
    let ctx = EvalContext {
        tokenizer: &tok,
        features: store.as_ref(),
        options: EvalOptions {
            text_conditioning: if no_image { TextConditioning::NoImage } else { TextConditioning::Placeholder },
            correlation: if pearson { Correlation::Pearson } else { Correlation::Spearman },
        },
    };
    Ok(evaluate_file(&params, &ctx, task_type, &task).map_err(py_err)?.to_json())
}

#[pyfunction]
fn estimate_words(subword_count: u64, ratio: f64) -> u64 {
    tv::trainer::estimate_words(subword_count, ratio)
}

#[pyfunction]
fn schedule_crossings(prev_words: u64, new_words: u64) -> Vec<u64> {
    tv::trainer::schedule_crossings(prev_words, new_words)
}

#[pyfunction]
fn spearman(xs: Vec<f64>, ys: Vec<f64>) -> PyResult<f64> {
    tv::eval::spearman(&xs, &ys).map_err(py_err)
}

#[pymodule]
fn tinyvlm(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTokenizer>()?;
    m.add_class::<PyFeatureStore>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(merge_checkpoints, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_words, m)?)?;
    m.add_function(wrap_pyfunction!(schedule_crossings, m)?)?;
    m.add_function(wrap_pyfunction!(spearman, m)?)?;
    m.add("PLACEHOLDER_KEY", tv::PLACEHOLDER_KEY)?;
    Ok(())
}
