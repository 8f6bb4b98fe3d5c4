//! On-disk checkpoints.
//!
//! A checkpoint is a directory holding `manifest.json` and `weights.bin`.
//! `weights.bin` is the magic `BLMC`, a `u32` version (= 1) and then raw
//! little-endian `f32` tensors, row-major, in manifest order with no padding.
//! The manifest records the model config, metadata, the tensor table and the
//! SHA-256 of `weights.bin`. Training checkpoints additionally carry
//! `optimizer.bin` (same layout: all first moments, then all second moments)
//! and the trainer position needed to resume.
//!
//! Directories are written under a temporary name and renamed into place, so a
//! reader never observes a partial checkpoint.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ParameterSet, Scalar, Tensor};
use crate::trainer::{
    AbortReport, Milestone, OptimizerState, Snapshot, StepLog, TrainConfig, TrainSink,
    TrainerProgress,
};

pub const MAGIC: &[u8; 4] = b"BLMC";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: u64 = 8;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";
pub const OPTIMIZER_FILE: &str = "optimizer.bin";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    TextOnly,
    Multimodal,
    Merged,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::TextOnly => "text_only",
            Modality::Multimodal => "multimodal",
            Modality::Merged => "merged",
        }
    }
}

/// A merge parent: where it was loaded from and the hash of its weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParentRef {
    pub path: String,
    pub weights_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MergeInfo {
    /// Weight of the language-only parent.
    pub alpha: f64,
    pub parent_llm: ParentRef,
    pub parent_vlm: ParentRef,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub words_seen: u64,
    pub modality: Modality,
    pub seed: u64,
    pub tokenizer_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub merge_info: Option<MergeInfo>,
}

impl CheckpointMeta {
    pub fn validate(&self) -> Result<()> {
        if self.tokenizer_hash.is_empty() {
            return Err(Error::Integrity("checkpoint meta: empty tokenizer_hash".into()));
        }
        match (&self.modality, &self.merge_info) {
            (Modality::Merged, None) => Err(Error::Integrity(
                "checkpoint meta: merged modality without merge_info".into(),
            )),
            (Modality::Merged, Some(m)) if !(0.0..=1.0).contains(&m.alpha) => Err(
                Error::Integrity(format!("checkpoint meta: alpha {} outside [0, 1]", m.alpha)),
            ),
            (Modality::TextOnly | Modality::Multimodal, Some(_)) => Err(Error::Integrity(
                "checkpoint meta: merge_info on an unmerged checkpoint".into(),
            )),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    /// Absolute byte offset inside the tensor file.
    pub offset: u64,
}

impl TensorEntry {
    pub fn nbytes(&self) -> u64 {
        4 * self.shape.iter().product::<usize>() as u64
    }
}

/// Trainer position stored with a training checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingManifest {
    pub progress: TrainerProgress,
    pub train_config: TrainConfig,
    pub optimizer_t: u64,
    pub optimizer_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub config: ModelConfig,
    pub meta: CheckpointMeta,
    pub n_tensors: usize,
    pub tensors: Vec<TensorEntry>,
    pub weights_sha256: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training: Option<TrainingManifest>,
}

/// Optimizer moments and trainer position for resuming.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingState<T> {
    pub progress: TrainerProgress,
    pub train_config: TrainConfig,
    pub optimizer: OptimizerState<T>,
}

/// Tensor table for the given shapes, gap-free from [`HEADER_LEN`].
pub fn tensor_table<'a>(shapes: impl IntoIterator<Item = (&'a str, &'a [usize])>) -> Vec<TensorEntry> {
    let mut offset = HEADER_LEN;
    shapes
        .into_iter()
        .map(|(name, shape)| {
            let e = TensorEntry {
                name: name.to_string(),
                dtype: "f32".into(),
                shape: shape.to_vec(),
                offset,
            };
            offset += e.nbytes();
            e
        })
        .collect()
}

fn config_table(config: &ModelConfig) -> Vec<TensorEntry> {
    let layout = config.layout();
    tensor_table(layout.iter().map(|(n, s, _)| (n.as_str(), s.as_slice())))
}

fn optimizer_table(config: &ModelConfig) -> Vec<TensorEntry> {
    let layout = config.layout();
    let names: Vec<(String, &[usize])> = ["m", "v"]
        .iter()
        .flat_map(|p| layout.iter().map(move |(n, s, _)| (format!("{p}.{n}"), s.as_slice())))
        .collect();
    tensor_table(names.iter().map(|(n, s)| (n.as_str(), *s)))
}

struct HashingWriter<W> {
    inner: W,
    hasher: Sha256,
}

impl<W: Write> Write for HashingWriter<W> {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.hasher.update(&buf[..n]);
        Ok(n)
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.inner.flush()
    }
}

/// Writes a tensor file and returns its SHA-256.
fn write_tensor_file<'a, T: Scalar>(
    path: &Path,
    tensors: impl IntoIterator<Item = &'a Tensor<T>>,
) -> Result<String> {
    let io = |e| Error::io(path, e);
    let file = File::create(path).map_err(io)?;
    let mut w = HashingWriter {
        inner: BufWriter::new(file),
        hasher: Sha256::new(),
    };
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
    for t in tensors {
        for &x in &t.data {
            w.write_all(&(x.f64() as f32).to_le_bytes()).map_err(io)?;
        }
    }
    let HashingWriter { inner, hasher } = w;
    let file = inner.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    file.sync_all().map_err(io)?;
    Ok(hex::encode(hasher.finalize()))
}

/// Reads and verifies a tensor file against `table`.
fn read_tensor_file(path: &Path, table: &[TensorEntry], sha256: &str) -> Result<Vec<Tensor<f32>>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let file = path.display();
    if bytes.len() < HEADER_LEN as usize {
        return Err(Error::Truncated {
            offset: bytes.len() as u64,
            what: format!("{file}: header"),
        });
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format(format!("{file}: bad magic")));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!("{file}: unsupported version {version}")));
    }
    let expected = table.last().map_or(HEADER_LEN, |e| e.offset + e.nbytes());
    if bytes.len() as u64 != expected {
        return Err(Error::Integrity(format!(
            "{file}: size {} bytes, manifest implies {expected}",
            bytes.len()
        )));
    }
    let actual = hex::encode(Sha256::digest(&bytes));
    if actual != sha256 {
        return Err(Error::Integrity(format!(
            "{file}: SHA-256 {actual} does not match manifest {sha256}"
        )));
    }
    Ok(table
        .iter()
        .map(|e| {
            let start = e.offset as usize;
            let raw = &bytes[start..start + e.nbytes() as usize];
            Tensor {
                shape: e.shape.clone(),
                data: raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            }
        })
        .collect())
}

fn check_table(got: &[TensorEntry], want: &[TensorEntry], what: &str) -> Result<()> {
    for (g, w) in got.iter().zip(want) {
        if g.name != w.name {
            return Err(Error::Integrity(format!(
                "{what}: tensor `{}` found where `{}` was expected",
                g.name, w.name
            )));
        }
        if g.shape != w.shape {
            return Err(Error::Integrity(format!(
                "{what}: tensor `{}` has shape {:?}, config implies {:?}",
                g.name, g.shape, w.shape
            )));
        }
        if g.dtype != "f32" {
            return Err(Error::Integrity(format!(
                "{what}: tensor `{}` has unsupported dtype `{}`",
                g.name, g.dtype
            )));
        }
        if g.offset != w.offset {
            return Err(Error::Integrity(format!(
                "{what}: tensor `{}` at offset {}, expected {}",
                g.name, g.offset, w.offset
            )));
        }
    }
    if got.len() != want.len() {
        let missing = want.get(got.len()).map_or("", |e| e.name.as_str());
        return Err(Error::Integrity(format!(
            "{what}: {} tensors listed, config implies {} (first missing: `{missing}`)",
            got.len(),
            want.len()
        )));
    }
    Ok(())
}

fn sync_dir(path: &Path) -> Result<()> {
    File::open(path)
        .and_then(|d| d.sync_all())
        .map_err(|e| Error::io(path, e))
}

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

/// Writes a checkpoint directory, refusing to replace an existing one unless `overwrite`.
pub fn write_checkpoint<T: Scalar>(
    params: &ParameterSet<T>,
    meta: &CheckpointMeta,
    training: Option<&TrainingState<T>>,
    dir: &Path,
    overwrite: bool,
) -> Result<()> {
    meta.validate()?;
    if dir.exists() && !overwrite {
        return Err(Error::AlreadyExists(dir.to_path_buf()));
    }
    let name = dir
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("bad checkpoint path {}", dir.display())))?;
    let parent = match dir.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&parent).map_err(|e| Error::io(&parent, e))?;
    let tmp = parent.join(format!(
        ".{}.tmp-{}-{}",
        name.to_string_lossy(),
        std::process::id(),
        TMP_COUNTER.fetch_add(1, Ordering::Relaxed)
    ));
    fs::create_dir(&tmp).map_err(|e| Error::io(&tmp, e))?;
    let result = write_into(params, meta, training, &tmp).and_then(|()| {
        if dir.exists() {
            fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))?;
        sync_dir(&parent)
    });
    if result.is_err() {
        let _ = fs::remove_dir_all(&tmp);
    }
    result
}

fn write_into<T: Scalar>(
    params: &ParameterSet<T>,
    meta: &CheckpointMeta,
    training: Option<&TrainingState<T>>,
    dir: &Path,
) -> Result<()> {
    let tensors: Vec<&Tensor<T>> = params.iter().map(|(_, t)| t).collect();
    let weights_sha256 = write_tensor_file(&dir.join(WEIGHTS_FILE), tensors)?;
    let training = match training {
        None => None,
        Some(s) => {
            let moments = s.optimizer.m.iter().chain(s.optimizer.v.iter()).map(|(_, t)| t);
            let optimizer_sha256 = write_tensor_file(&dir.join(OPTIMIZER_FILE), moments)?;
            Some(TrainingManifest {
                progress: s.progress.clone(),
                train_config: s.train_config.clone(),
                optimizer_t: s.optimizer.t,
                optimizer_sha256,
            })
        }
    };
    let tensors = config_table(&params.config);
    let manifest = Manifest {
        format_version: VERSION,
        config: params.config.clone(),
        meta: meta.clone(),
        n_tensors: tensors.len(),
        tensors,
        weights_sha256,
        training,
    };
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    let mut f = File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(json.as_bytes()).map_err(|e| Error::io(&path, e))?;
    f.sync_all().map_err(|e| Error::io(&path, e))?;
    sync_dir(dir)
}

/// Saves an inference checkpoint; fails if `dir` exists.
pub fn save_checkpoint<T: Scalar>(params: &ParameterSet<T>, meta: &CheckpointMeta, dir: &Path) -> Result<()> {
    write_checkpoint(params, meta, None, dir, false)
}

/// Parses and validates `manifest.json` without touching the weights.
pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.clone(),
        line: e.line(),
        message: e.to_string(),
    })?;
    if manifest.format_version != VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported format_version {}",
            path.display(),
            manifest.format_version
        )));
    }
    manifest.config.validate()?;
    manifest.meta.validate()?;
    let what = path.display().to_string();
    if manifest.n_tensors != manifest.tensors.len() {
        return Err(Error::Integrity(format!(
            "{what}: n_tensors {} but {} table entries",
            manifest.n_tensors,
            manifest.tensors.len()
        )));
    }
    check_table(&manifest.tensors, &config_table(&manifest.config), &what)?;
    Ok(manifest)
}

pub fn load_checkpoint(dir: &Path) -> Result<(ParameterSet<f32>, CheckpointMeta)> {
    let manifest = read_manifest(dir)?;
    let tensors = read_tensor_file(&dir.join(WEIGHTS_FILE), &manifest.tensors, &manifest.weights_sha256)?;
    let named = manifest.tensors.iter().map(|e| e.name.clone()).zip(tensors);
    let params = ParameterSet::from_tensors(manifest.config, named.collect::<Vec<_>>())?;
    Ok((params, manifest.meta))
}

/// Loads parameters, metadata and, if present, the resume state.
pub fn load_training_checkpoint(
    dir: &Path,
) -> Result<(ParameterSet<f32>, CheckpointMeta, Option<TrainingState<f32>>)> {
    let manifest = read_manifest(dir)?;
    let (params, meta) = load_checkpoint(dir)?;
    let Some(tm) = manifest.training else {
        return Ok((params, meta, None));
    };
    let table = optimizer_table(&params.config);
    let tensors = read_tensor_file(&dir.join(OPTIMIZER_FILE), &table, &tm.optimizer_sha256)?;
    let n = params.len();
    let split = |range: std::ops::Range<usize>| {
        let named = params.names().map(str::to_string).zip(tensors[range].iter().cloned());
        ParameterSet::from_tensors(params.config.clone(), named.collect::<Vec<_>>())
    };
    let optimizer = OptimizerState {
        m: split(0..n)?,
        v: split(n..2 * n)?,
        t: tm.optimizer_t,
    };
    Ok((
        params,
        meta,
        Some(TrainingState {
            progress: tm.progress,
            train_config: tm.train_config,
            optimizer,
        }),
    ))
}

/// Checkpoint directory name for a milestone.
pub fn milestone_dir_name(threshold: u64) -> String {
    format!("ckpt_{threshold}")
}

/// Training sink that writes `ckpt_<threshold>` directories, appends the
/// step log as CSV and, on abort, writes diagnostics plus a last-good checkpoint.
pub struct CheckpointSink {
    out_dir: PathBuf,
    meta: CheckpointMeta,
    train_config: TrainConfig,
    overwrite: bool,
    log: Option<BufWriter<File>>,
    written: Vec<PathBuf>,
}

pub const LOG_FILE: &str = "train_log.csv";
pub const ABORT_FILE: &str = "abort.json";
pub const LAST_GOOD_DIR: &str = "last_good";

impl CheckpointSink {
    /// `meta.words_seen` is replaced per checkpoint. With `append`, an existing
    /// log is continued instead of started afresh.
    pub fn new(
        out_dir: &Path,
        meta: CheckpointMeta,
        train_config: TrainConfig,
        overwrite: bool,
        append: bool,
    ) -> Result<Self> {
        fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let path = out_dir.join(LOG_FILE);
        let exists = path.exists();
        if exists && !append && !overwrite {
            return Err(Error::AlreadyExists(path));
        }
        let file = fs::OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        let mut log = BufWriter::new(file);
        if !(append && exists) {
            writeln!(log, "step,words_seen,loss,lr").map_err(|e| Error::io(&path, e))?;
        }
        Ok(Self {
            out_dir: out_dir.to_path_buf(),
            meta,
            train_config,
            overwrite,
            log: Some(log),
            written: Vec::new(),
        })
    }

    /// Checkpoint directories written so far, in order.
    pub fn written(&self) -> &[PathBuf] {
        &self.written
    }

    /// Writes a checkpoint named `name` from an arbitrary state.
    pub fn save<T: Scalar>(
        &mut self,
        name: &str,
        params: &ParameterSet<T>,
        optimizer: &OptimizerState<T>,
        progress: TrainerProgress,
        words_seen: u64,
    ) -> Result<PathBuf> {
        let dir = self.out_dir.join(name);
        let meta = CheckpointMeta {
            words_seen,
            ..self.meta.clone()
        };
        let state = TrainingState {
            progress,
            train_config: self.train_config.clone(),
            optimizer: optimizer.clone(),
        };
        write_checkpoint(params, &meta, Some(&state), &dir, self.overwrite)?;
        self.written.push(dir.clone());
        Ok(dir)
    }

    pub fn flush(&mut self) -> Result<()> {
        let path = self.out_dir.join(LOG_FILE);
        if let Some(log) = self.log.as_mut() {
            log.flush().map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

impl<T: Scalar> TrainSink<T> for CheckpointSink {
    fn on_step(&mut self, entry: &StepLog) -> Result<()> {
        let path = self.out_dir.join(LOG_FILE);
        if let Some(log) = self.log.as_mut() {
            writeln!(log, "{},{},{},{}", entry.step, entry.words_seen, entry.loss, entry.lr)
                .map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    fn on_milestone(&mut self, m: &Milestone, snap: &Snapshot<'_, T>) -> Result<()> {
        self.flush()?;
        self.save(
            &milestone_dir_name(m.threshold),
            snap.params,
            snap.optimizer,
            snap.progress.clone(),
            m.words_seen,
        )?;
        log::info!("checkpoint {} at {} words", m.threshold, m.words_seen);
        Ok(())
    }

    fn on_abort(&mut self, report: &AbortReport, snap: &Snapshot<'_, T>) -> Result<()> {
        self.flush()?;
        let path = self.out_dir.join(ABORT_FILE);
        let json = serde_json::to_string_pretty(report).expect("report serializes");
        fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
        let words = snap.progress.schedule.words_seen;
        let dir = self.out_dir.join(LAST_GOOD_DIR);
        let state = TrainingState {
            progress: snap.progress.clone(),
            train_config: self.train_config.clone(),
            optimizer: snap.optimizer.clone(),
        };
        let meta = CheckpointMeta {
            words_seen: words,
            ..self.meta.clone()
        };
        write_checkpoint(snap.params, &meta, Some(&state), &dir, true)?;
        self.written.push(dir);
        Ok(())
    }
}

impl Drop for CheckpointSink {
    fn drop(&mut self) {
        let _ = self.flush();
    }
}
